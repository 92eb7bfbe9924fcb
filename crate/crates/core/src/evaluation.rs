//! Ranking and threshold metrics, multi-seed experiment runners and
//! candidate ranking for case studies.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::FusionMode;
use crate::data::{cold_start_split, warm_split, Dataset, Side, SplitPlan};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::trainer::{fit_model, TrainConfig, Trainer};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const COLD_START_FRACTIONS: [f64; 2] = [0.02, 0.04];

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numerical(format!("score {s} cannot be ranked")));
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(Error::Data("AUROC needs both positive and negative labels".into()));
    }
    // walk from the top; each positive beats every negative ranked below it
    let mut negatives_below = n as f64;
    let mut wins = 0.0;
    for group in descending_groups(scores) {
        let (gp, gn) = class_counts(&group.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        negatives_below -= gn as f64;
        wins += gp as f64 * (negatives_below + 0.5 * gn as f64);
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Step-wise area under the precision-recall curve over descending unique
/// thresholds.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(Error::Data("AUPR needs at least one positive label".into()));
    }
    let (mut tp, mut seen, mut area, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    for group in descending_groups(scores) {
        tp += group.iter().filter(|&&i| labels[i]).count();
        seen += group.len();
        let recall = tp as f64 / p as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

/// Confusion-matrix metrics with `score >= threshold` predicted positive.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_lengths(scores, labels)?;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Ok(ThresholdMetrics {
        precision,
        recall,
        f1,
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub degenerate: bool,
}

impl RunMetrics {
    pub fn compute(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        let t = threshold_metrics(scores, labels, threshold)?;
        Ok(Self {
            auroc: auroc(scores, labels)?,
            aupr: aupr(scores, labels)?,
            precision: t.precision,
            recall: t.recall,
            f1: t.f1,
            threshold,
            degenerate: t.degenerate,
        })
    }

    fn values(&self) -> [f64; 5] {
        [self.auroc, self.aupr, self.precision, self.recall, self.f1]
    }
}

const METRIC_NAMES: [&str; 5] = ["auroc", "aupr", "precision", "recall", "f1"];

/// Mean and unbiased sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub runs: usize,
    pub mean: [f64; 5],
    pub std: [f64; 5],
    pub degenerate_runs: usize,
}

impl MetricsSummary {
    pub fn from_runs(runs: &[RunMetrics]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Data("no runs to summarize".into()));
        }
        let n = runs.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for k in 0..5 {
            mean[k] = runs.iter().map(|r| r.values()[k]).sum::<f64>() / n;
            if runs.len() > 1 {
                let ss: f64 = runs.iter().map(|r| (r.values()[k] - mean[k]).powi(2)).sum();
                std[k] = (ss / (n - 1.0)).sqrt();
            }
        }
        Ok(Self {
            runs: runs.len(),
            mean,
            std,
            degenerate_runs: runs.iter().filter(|r| r.degenerate).count(),
        })
    }

    pub fn mean_of(&self, metric: &str) -> Option<f64> {
        METRIC_NAMES.iter().position(|&m| m == metric).map(|k| self.mean[k])
    }

    pub fn auroc(&self) -> f64 {
        self.mean[0]
    }

    pub fn aupr(&self) -> f64 {
        self.mean[1]
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8}\n", "metric", "mean", "std");
        for k in 0..5 {
            writeln!(out, "{:<10} {:>8.4} {:>8.4}", METRIC_NAMES[k], self.mean[k], self.std[k]).unwrap();
        }
        out
    }

    /// `key=value` lines with the given prefix.
    pub fn key_values(&self, prefix: &str) -> String {
        let mut out = format!("{prefix}runs={}\n", self.runs);
        for k in 0..5 {
            writeln!(out, "{prefix}{}_mean={}", METRIC_NAMES[k], self.mean[k]).unwrap();
            writeln!(out, "{prefix}{}_std={}", METRIC_NAMES[k], self.std[k]).unwrap();
        }
        writeln!(out, "{prefix}degenerate_runs={}", self.degenerate_runs).unwrap();
        out
    }
}

impl fmt::Display for MetricsSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

/// Scores a trained model on its plan's test pairs.
pub fn evaluate(trainer: &Trainer) -> Result<RunMetrics> {
    let (pairs, labels) = trainer.plan().test_pairs();
    let scores = trainer.predict(&pairs)?;
    let labels: Vec<bool> = labels.iter().map(|&y| y == 1.0).collect();
    RunMetrics::compute(&scores, &labels, DEFAULT_THRESHOLD)
}

/// Trains on `plan` with `config` and evaluates on its test pairs.
pub fn train_and_evaluate(ds: &Dataset, plan: &SplitPlan, config: &TrainConfig) -> Result<RunMetrics> {
    let (trainer, _) = fit_model(ds, plan, config)?;
    evaluate(&trainer)
}

/// One warm-start run per seed; the seed drives both the split and training.
pub fn run_warm(ds: &Dataset, config: &TrainConfig, seeds: &[u64]) -> Result<Vec<RunMetrics>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let plan = warm_split(ds, config.test_fraction, seed, config.test_negatives)?;
            train_and_evaluate(ds, &plan, &TrainConfig { seed, ..config.clone() })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColdStartRun {
    pub fraction: f64,
    pub seed: u64,
    pub held_out: Vec<usize>,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub side: Side,
    pub runs: Vec<ColdStartRun>,
    /// `(fraction, seed, reason)` for plans that could not be evaluated.
    pub skipped: Vec<(f64, u64, String)>,
    pub summary: MetricsSummary,
}

/// Trains once per `(fraction, seed)` with the chosen side's nodes withheld
/// and averages over all of them.
pub fn run_cold_start(ds: &Dataset, config: &TrainConfig, side: Side, fractions: &[f64], seeds: &[u64]) -> Result<ColdStartReport> {
    let jobs: Vec<(f64, u64)> = fractions.iter().flat_map(|&f| seeds.iter().map(move |&s| (f, s))).collect();
    let outcomes: Vec<Result<std::result::Result<ColdStartRun, (f64, u64, String)>>> = jobs
        .par_iter()
        .map(|&(fraction, seed)| {
            let plan = cold_start_split(ds, side, fraction, seed)?;
            let labels_ok = !plan.test_positives.is_empty() && !plan.test_negatives.is_empty();
            if plan.degenerate || !labels_ok {
                return Ok(Err((fraction, seed, "held-out nodes have no usable test pairs".to_string())));
            }
            let metrics = train_and_evaluate(ds, &plan, &TrainConfig { seed, ..config.clone() })?;
            Ok(Ok(ColdStartRun {
                fraction,
                seed,
                held_out: plan.held_out.clone(),
                metrics,
            }))
        })
        .collect();
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            Ok(r) => runs.push(r),
            Err(s) => skipped.push(s),
        }
    }
    let summary = MetricsSummary::from_runs(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>())?;
    Ok(ColdStartReport {
        side,
        runs,
        skipped,
        summary,
    })
}

/// Ablation scenario labels accepted by [`apply_scenario`].
pub const SCENARIOS: [&str; 13] = [
    "full",
    "-Trans",
    "-GNN",
    "Attention",
    "GCN",
    "-drug",
    "-micro",
    "-drug microbe",
    "close",
    "fusion:add",
    "fusion:multiply",
    "fusion:concatDim",
    "fusion:cross",
];

/// The configuration for a named ablation scenario.
pub fn apply_scenario(config: &TrainConfig, scenario: &str) -> Result<TrainConfig> {
    let mut c = config.clone();
    match scenario {
        "full" | "fusion:bsam" => {}
        "-Trans" => c.no_trans = true,
        "-GNN" => c.no_gnn = true,
        "Attention" => c.attention_swap = true,
        "GCN" => c.gcn_swap = true,
        "-drug" => c.no_adv_drug = true,
        "-micro" => c.no_adv_microbe = true,
        "-drug microbe" => {
            c.no_adv_drug = true;
            c.no_adv_microbe = true;
        }
        "close" => c.adv_close = true,
        other => match other.strip_prefix("fusion:") {
            Some(mode) => c.fusion = mode.parse::<FusionMode>()?,
            None => return Err(Error::Config(format!("unknown scenario {other:?}"))),
        },
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    /// Number of targets whose top-k list contains the candidate.
    pub frequency: usize,
    /// Mean score over all targets.
    pub mean_score: f64,
}

/// For each target (rows of `scores` when `target_side` is drugs, columns
/// otherwise), keeps the `top_k` best opposite-side candidates, then ranks
/// candidates by how many lists they appear in, then by mean score, then by
/// index, and keeps the leading `ceil(top_fraction * len)`.
pub fn rank_candidates(scores: &Matrix, target_side: Side, targets: &[usize], top_k: usize, top_fraction: f64) -> Result<Vec<RankedCandidate>> {
    if targets.is_empty() {
        return Err(Error::Config("no target nodes given".into()));
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction must lie in (0, 1], got {top_fraction}")));
    }
    let (n_targets, n_candidates) = match target_side {
        Side::Drug => (scores.rows(), scores.cols()),
        Side::Microbe => (scores.cols(), scores.rows()),
    };
    let score = |t: usize, c: usize| match target_side {
        Side::Drug => scores.get(t, c),
        Side::Microbe => scores.get(c, t),
    };
    if let Some(&t) = targets.iter().find(|&&t| t >= n_targets) {
        return Err(Error::Config(format!("target index {t} out of range")));
    }
    let mut frequency = vec![0usize; n_candidates];
    let mut total = vec![0.0; n_candidates];
    for &t in targets {
        let mut order: Vec<usize> = (0..n_candidates).collect();
        order.sort_by(|&a, &b| score(t, b).total_cmp(&score(t, a)).then(a.cmp(&b)));
        for &c in order.iter().take(top_k) {
            frequency[c] += 1;
        }
        for (c, acc) in total.iter_mut().enumerate() {
            *acc += score(t, c);
        }
    }
    let mut ranked: Vec<RankedCandidate> = (0..n_candidates)
        .filter(|&c| frequency[c] > 0)
        .map(|c| RankedCandidate {
            index: c,
            frequency: frequency[c],
            mean_score: total[c] / targets.len() as f64,
        })
        .collect();
    ranked.sort_by(|a, b| b.frequency.cmp(&a.frequency).then(b.mean_score.total_cmp(&a.mean_score)).then(a.index.cmp(&b.index)));
    let keep = ((top_fraction * ranked.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    ranked.truncate(keep);
    Ok(ranked)
}

/// TSV `candidate frequency meanScore` using the candidates' names.
pub fn ranking_tsv(ranked: &[RankedCandidate], names: &[String]) -> String {
    let mut out = String::from("candidate\tfrequency\tmeanScore\n");
    for r in ranked {
        writeln!(out, "{}\t{}\t{}", names[r.index], r.frequency, r.mean_score).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::toy_dataset;
    use proptest::prelude::*;

    fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] && !y[j] {
                    pairs += 1.0;
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    /// Sum over every distinct threshold of (recall gain) x precision there.
    fn brute_aupr(s: &[f64], y: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let p = y.iter().filter(|&&v| v).count() as f64;
        let (mut area, mut prev) = (0.0, 0.0);
        for t in thresholds {
            let tp = (0..s.len()).filter(|&i| s[i] >= t && y[i]).count() as f64;
            let k = (0..s.len()).filter(|&i| s[i] >= t).count() as f64;
            area += (tp / p - prev) * tp / k;
            prev = tp / p;
        }
        area
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let (s, y) = ([0.9, 0.8, 0.7, 0.1], [true, false, true, false]);
        assert_eq!(auroc(&s, &y).unwrap(), 0.75);
        assert_eq!(brute_auroc(&s, &y), 0.75);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        for n in 2..8 {
            let s: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / n as f64).collect();
            let mut y = vec![false; n];
            y[n - 1] = true;
            assert!((aupr(&s, &y).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        }
        assert_eq!(aupr(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(aupr(&[0.3, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = threshold_metrics(&[0.9, 0.7, 0.2, 0.1], &[true, true, false, false], 0.5).unwrap();
        assert_eq!((t.precision, t.recall, t.f1, t.degenerate), (1.0, 1.0, 1.0, false));
        let t = threshold_metrics(&[0.1, 0.2], &[true, false], 0.5).unwrap();
        assert_eq!((t.precision, t.recall), (0.0, 0.0));
        assert!(t.degenerate);
        // TP at 0.9 and 0.8, FP at 0.6, FN at 0.3
        let t = threshold_metrics(&[0.9, 0.8, 0.6, 0.3, 0.1], &[true, true, false, true, false], 0.5).unwrap();
        for v in [t.precision, t.recall, t.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    fn scored(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        // coarse scores make ties common
        prop::collection::vec((0u8..12, any::<bool>()), 2..max)
            .prop_map(|v| (v.iter().map(|p| p.0 as f64 / 11.0).collect::<Vec<f64>>(), v.iter().map(|p| p.1).collect::<Vec<bool>>()))
            .prop_filter("both classes", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn metrics_match_brute_force((s, y) in scored(100)) {
            prop_assert!((auroc(&s, &y).unwrap() - brute_auroc(&s, &y)).abs() < 1e-12);
            prop_assert!((aupr(&s, &y).unwrap() - brute_aupr(&s, &y)).abs() < 1e-12);
            let m = RunMetrics::compute(&s, &y, 0.5).unwrap();
            for v in m.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }

        #[test]
        fn auroc_invariant_under_monotone_maps((s, y) in scored(60)) {
            let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&mapped, &y).unwrap());
        }

        #[test]
        fn auroc_flips_under_negation(raw in prop::collection::hash_set(0u32..100_000, 2..60), flags in prop::collection::vec(any::<bool>(), 60)) {
            let s: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let mut y: Vec<bool> = flags[..s.len()].to_vec();
            y[0] = true;
            y[1] = false;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    fn run(auroc: f64) -> RunMetrics {
        RunMetrics {
            auroc,
            aupr: 0.5,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            threshold: 0.5,
            degenerate: false,
        }
    }

    #[test]
    fn summaries_use_sample_standard_deviation() {
        let s = MetricsSummary::from_runs(&[run(0.9), run(0.8), run(1.0)]).unwrap();
        assert!((s.auroc() - 0.9).abs() < 1e-15);
        assert!((s.std[0] - 0.1).abs() < 1e-15);
        assert_eq!(MetricsSummary::from_runs(&[run(0.7)]).unwrap().std[0], 0.0);
        assert!(MetricsSummary::from_runs(&[]).is_err());
        assert!(s.key_values("warm.").contains("warm.auroc_mean=0.9"));
        assert!(s.table().starts_with("metric"));
    }

    #[test]
    fn scenarios_map_to_flags() {
        let base = TrainConfig::default();
        let c = apply_scenario(&base, "-drug microbe").unwrap();
        assert_eq!(c.effective_betas(), (0.0, 0.0));
        assert!(apply_scenario(&base, "close").unwrap().adv_close);
        assert_eq!(apply_scenario(&base, "fusion:add").unwrap().fusion, FusionMode::Add);
        assert_eq!(apply_scenario(&base, "full").unwrap(), base);
        for s in SCENARIOS {
            apply_scenario(&base, s).unwrap();
        }
        assert!(apply_scenario(&base, "-everything").is_err());
        assert!(apply_scenario(&base, "fusion:sum").is_err());
    }

    #[test]
    fn single_target_ranking_is_its_top_k() {
        let scores = Matrix::from_rows(&[[0.1, 0.9, 0.5, 0.7], [0.3, 0.2, 0.8, 0.6]]).unwrap();
        let r = rank_candidates(&scores, Side::Drug, &[0], 3, 1.0).unwrap();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert!(r.iter().all(|c| c.frequency == 1));
    }

    #[test]
    fn identical_targets_tie_break_on_mean_score() {
        let scores = Matrix::from_rows(&[[0.4, 0.9, 0.6], [0.5, 0.9, 0.7]]).unwrap();
        let r = rank_candidates(&scores, Side::Microbe, &[0, 1, 2], 2, 1.0).unwrap();
        assert_eq!(r.iter().map(|c| (c.index, c.frequency)).collect::<Vec<_>>(), vec![(1, 3), (0, 3)]);
        assert!(r[0].mean_score > r[1].mean_score);
    }

    #[test]
    fn three_target_ranking_matches_brute_force() {
        // rows are candidate drugs, columns the three target microbes
        let scores = Matrix::from_rows(&[[0.9, 0.1, 0.5], [0.8, 0.7, 0.2], [0.3, 0.9, 0.6], [0.2, 0.8, 0.9], [0.1, 0.2, 0.8]]).unwrap();
        let r = rank_candidates(&scores, Side::Microbe, &[0, 1, 2], 2, 0.5).unwrap();
        // top-2 lists: {0,1}, {2,3}, {3,4}; frequencies 1,1,1,2,1
        let mut brute: Vec<(usize, usize, f64)> = (0..5)
            .map(|c| {
                let freq = [[0, 1], [2, 3], [3, 4]].iter().filter(|l| l.contains(&c)).count();
                (c, freq, (0..3).map(|t| scores.get(c, t)).sum::<f64>() / 3.0)
            })
            .collect();
        brute.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        let expected: Vec<usize> = brute.iter().take(3).map(|b| b.0).collect();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), expected);
        assert_eq!(expected, vec![3, 2, 1]);
        assert!(rank_candidates(&scores, Side::Microbe, &[], 2, 0.5).is_err());
        assert!(rank_candidates(&scores, Side::Microbe, &[3], 2, 0.5).is_err());
        let names: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
        assert!(ranking_tsv(&r, &names).starts_with("candidate\tfrequency\tmeanScore\nd3\t2\t"));
    }

    #[test]
    fn toy_runs_produce_finite_reports() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            dim: 8,
            heads: 2,
            sample_size: 4,
            test_fraction: 0.2,
            ..TrainConfig::default()
        };
        let warm = run_warm(&ds, &cfg, &[0, 1]).unwrap();
        assert_eq!(warm.len(), 2);
        let cold = run_cold_start(&ds, &cfg, Side::Drug, &[0.2], &[0]).unwrap();
        assert!(cold.runs.len() + cold.skipped.len() == 1);
        for m in warm.iter().chain(cold.runs.iter().map(|r| &r.metrics)) {
            assert!(m.values().iter().all(|v| v.is_finite()));
        }
    }
}
