use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dcfa::data::{warm_split, Dataset, Side};
use dcfa::evaluation::{self, MetricsSummary, RunMetrics};
use dcfa::numerics::GradCheckConfig;
use dcfa::synth::{generate, SynthSpec};
use dcfa::trainer::{gradient_check, preflight_gradcheck, Checkpoint, EpochLosses, TrainConfig, Trainer};
use log::info;

use crate::args::{Command, ConfigArgs, DataArgs};
use crate::manifest::RunManifest;
use crate::CliError;

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { data, config, out, gradcheck } => train(&data, &config, &out, gradcheck),
        Command::Evaluate {
            data,
            config,
            out,
            checkpoint,
            runs,
        } => evaluate(&data, &config, &out, checkpoint.as_deref(), runs),
        Command::Coldstart {
            data,
            config,
            out,
            side,
            fractions,
            runs,
        } => coldstart(&data, &config, &out, &side.sides(), &fractions, runs),
        Command::Ablate { data, config, out, runs } => ablate(&data, &config, &out, runs),
        Command::Rank {
            data,
            checkpoint,
            out,
            targets,
            top_k,
            top_fraction,
        } => rank(&data, &checkpoint, &out, &targets, top_k, top_fraction),
        Command::Gradcheck { data, config, out } => gradcheck(&data, &config, out.as_deref()),
        Command::Synth {
            out,
            n_drugs,
            n_microbes,
            communities,
            p_in,
            p_out,
            sigma,
            seed,
        } => synth(
            &SynthSpec {
                n_drugs,
                n_microbes,
                communities,
                p_in,
                p_out,
                sigma_s: sigma,
                seed,
            },
            &out,
        ),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Loads the dataset and opens a manifest recording the inputs.
fn start(command: &str, data: &DataArgs, out: &Path) -> Result<(Dataset, RunManifest), CliError> {
    let ds = data.load()?;
    create_dir(out)?;
    let mut manifest = RunManifest::start(command);
    for (role, path) in data.paths()? {
        manifest.input(role, path)?;
    }
    for side in [Side::Drug, Side::Microbe] {
        let source = if ds.uses_profile_similarity(side) { "training_profile_kernel" } else { "file" };
        manifest.detail(&format!("{side}_similarity_source"), source);
    }
    Ok((ds, manifest))
}

fn seeds(config: &TrainConfig, runs: u64) -> Result<Vec<u64>, CliError> {
    if runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".into()));
    }
    Ok((config.seed..config.seed + runs).collect())
}

fn run_metrics_tsv(rows: &[(String, RunMetrics)]) -> String {
    let mut out = String::from("run\tauroc\taupr\tprecision\trecall\tf1\tdegenerate\n");
    for (label, m) in rows {
        writeln!(out, "{label}\t{}\t{}\t{}\t{}\t{}\t{}", m.auroc, m.aupr, m.precision, m.recall, m.f1, m.degenerate).unwrap();
    }
    out
}

fn report(title: &str, summary: &MetricsSummary, prefix: &str, negatives: &str) -> String {
    format!("# {title} (test negatives: {negatives})\n{}{}", summary.table(), summary.key_values(prefix))
}

fn check_gradients(config: &TrainConfig, manifest: &mut RunManifest) -> Result<(), CliError> {
    let report = preflight_gradcheck(config, &GradCheckConfig::default())?;
    let max = report.max_rel_error();
    manifest.detail("preflight_gradcheck_max_rel_error", max);
    if !report.passed() {
        let worst = report.worst().map(|w| w.param.clone()).unwrap_or_default();
        return Err(CliError::Numerical(format!("gradient check failed: max relative error {max:e} in {worst}")));
    }
    info!("gradient check passed (max relative error {max:.2e})");
    Ok(())
}

fn train(data: &DataArgs, config: &ConfigArgs, out: &Path, gradcheck: bool) -> Result<(), CliError> {
    let config = config.resolve()?;
    let (ds, manifest) = start("train", data, out)?;
    let mut manifest = manifest.with_config(&config);
    if gradcheck {
        check_gradients(&config, &mut manifest)?;
    }
    let plan = warm_split(&ds, config.test_fraction, config.seed, config.test_negatives)?;
    let mut trainer = Trainer::new(&ds, &plan, &config)?;
    let every = (config.epochs / 10).max(1);
    let curve = trainer.fit(|l| {
        if l.epoch % every == 0 || l.epoch == config.epochs {
            info!("epoch {}: total loss {:.6}", l.epoch, l.total);
        }
    })?;
    let mut log = format!("{}\n", EpochLosses::HEADER);
    for l in &curve {
        writeln!(log, "{l}").unwrap();
    }
    write(out, "train_log.tsv", &log)?;
    trainer.checkpoint().save(&out.join("checkpoint.json"))?;
    plan.write(&out.join("split.json"))?;
    let metrics = evaluation::evaluate(&trainer)?;
    let summary = MetricsSummary::from_runs(&[metrics])?;
    let text = report("held-out test split", &summary, "test.", &config.test_negatives.to_string());
    write(out, "metrics.txt", &text)?;
    print!("{text}");
    manifest.finish(out, &["train_log.tsv", "checkpoint.json", "split.json", "metrics.txt"])?;
    Ok(())
}

fn evaluate(data: &DataArgs, config: &ConfigArgs, out: &Path, checkpoint: Option<&Path>, runs: u64) -> Result<(), CliError> {
    let (ds, mut manifest) = start("evaluate", data, out)?;
    let (config, rows) = match checkpoint {
        Some(path) => {
            manifest.input("checkpoint", path)?;
            let trainer = Trainer::from_checkpoint(&ds, Checkpoint::load(path)?)?;
            let m = evaluation::evaluate(&trainer)?;
            (trainer.config().clone(), vec![(format!("seed{}", trainer.config().seed), m)])
        }
        None => {
            let config = config.resolve()?;
            let seeds = seeds(&config, runs)?;
            let metrics = evaluation::run_warm(&ds, &config, &seeds)?;
            let rows = seeds.iter().zip(metrics).map(|(s, m)| (format!("seed{s}"), m)).collect();
            (config, rows)
        }
    };
    let mut manifest = manifest.with_config(&config);
    manifest.detail("runs", rows.len());
    let summary = MetricsSummary::from_runs(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let text = report("warm-start evaluation", &summary, "warm.", &config.test_negatives.to_string());
    write(out, "metrics.txt", &text)?;
    write(out, "runs.tsv", &run_metrics_tsv(&rows))?;
    print!("{text}");
    manifest.finish(out, &["metrics.txt", "runs.tsv"])?;
    Ok(())
}

fn coldstart(data: &DataArgs, config: &ConfigArgs, out: &Path, sides: &[Side], fractions: &[f64], runs: u64) -> Result<(), CliError> {
    let config = config.resolve()?;
    let (ds, manifest) = start("coldstart", data, out)?;
    let mut manifest = manifest.with_config(&config);
    let seeds = seeds(&config, runs)?;
    manifest.detail("fractions", fractions);
    let mut text = String::new();
    let mut rows = Vec::new();
    for &side in sides {
        let r = evaluation::run_cold_start(&ds, &config, side, fractions, &seeds)?;
        text += &report(&format!("cold-start {side}"), &r.summary, &format!("{side}."), "all pairs of held-out nodes");
        for (fraction, seed, reason) in &r.skipped {
            writeln!(text, "{side}.skipped fraction={fraction} seed={seed} reason={reason:?}").unwrap();
        }
        rows.extend(r.runs.iter().map(|run| (format!("{side}:{}:seed{}", run.fraction, run.seed), run.metrics)));
        manifest.detail(&format!("{side}_held_out"), r.runs.iter().map(|run| run.held_out.clone()).collect::<Vec<_>>());
    }
    write(out, "metrics.txt", &text)?;
    write(out, "runs.tsv", &run_metrics_tsv(&rows))?;
    print!("{text}");
    manifest.finish(out, &["metrics.txt", "runs.tsv"])?;
    Ok(())
}

fn ablate(data: &DataArgs, config: &ConfigArgs, out: &Path, runs: u64) -> Result<(), CliError> {
    let base = config.resolve_base()?;
    let mut scenarios: Vec<String> = if config.scenario.is_empty() {
        evaluation::SCENARIOS.iter().map(|s| s.to_string()).collect()
    } else {
        config.scenario.clone()
    };
    scenarios.sort();
    scenarios.dedup();
    let configs = scenarios
        .iter()
        .map(|s| evaluation::apply_scenario(&base, s))
        .collect::<dcfa::Result<Vec<_>>>()?;
    let (ds, manifest) = start("ablate", data, out)?;
    let mut manifest = manifest.with_config(&base);
    manifest.detail("scenarios", &scenarios);
    let seeds = seeds(&base, runs)?;
    let mut table = String::from("scenario\truns\tauroc_mean\tauroc_std\taupr_mean\taupr_std\tf1_mean\tf1_std\n");
    let mut text = String::new();
    let mut rows = Vec::new();
    for (scenario, config) in scenarios.iter().zip(&configs) {
        info!("scenario {scenario}");
        let metrics = evaluation::run_warm(&ds, config, &seeds)?;
        let s = MetricsSummary::from_runs(&metrics)?;
        writeln!(table, "{scenario}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", s.runs, s.mean[0], s.std[0], s.mean[1], s.std[1], s.mean[4], s.std[4]).unwrap();
        text += &s.key_values(&format!("{scenario}."));
        rows.extend(seeds.iter().zip(metrics).map(|(seed, m)| (format!("{scenario}:seed{seed}"), m)));
    }
    write(out, "ablation.tsv", &table)?;
    write(out, "metrics.txt", &text)?;
    write(out, "runs.tsv", &run_metrics_tsv(&rows))?;
    print!("{table}");
    manifest.finish(out, &["ablation.tsv", "metrics.txt", "runs.tsv"])?;
    Ok(())
}

/// Resolves names to indices on one side; every name must exist there.
fn resolve_targets(ds: &Dataset, names: &[String]) -> Result<(Side, Vec<usize>), CliError> {
    let first = names.first().ok_or_else(|| CliError::Config("no targets given".into()))?;
    let side = if ds.names(Side::Drug).contains(first) {
        Side::Drug
    } else if ds.names(Side::Microbe).contains(first) {
        Side::Microbe
    } else {
        return Err(CliError::Data(format!("unknown node name {first:?}")));
    };
    let indices = names
        .iter()
        .map(|n| {
            ds.names(side)
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| CliError::Data(format!("unknown {side} name {n:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((side, indices))
}

fn rank(data: &DataArgs, checkpoint: &Path, out: &Path, targets: &[String], top_k: usize, top_fraction: f64) -> Result<(), CliError> {
    let (ds, mut manifest) = start("rank", data, out)?;
    manifest.input("checkpoint", checkpoint)?;
    let (side, indices) = resolve_targets(&ds, targets)?;
    let trainer = Trainer::from_checkpoint(&ds, Checkpoint::load(checkpoint)?)?;
    let mut manifest = manifest.with_config(trainer.config());
    manifest.detail("targets", targets);
    manifest.detail("top_k", top_k);
    manifest.detail("top_fraction", top_fraction);
    let scores = trainer.score_matrix()?;
    let ranked = evaluation::rank_candidates(&scores, side, &indices, top_k, top_fraction)?;
    let tsv = evaluation::ranking_tsv(&ranked, ds.names(side.opposite()));
    write(out, "ranking.tsv", &tsv)?;
    print!("{tsv}");
    manifest.finish(out, &["ranking.tsv"])?;
    Ok(())
}

fn gradcheck(data: &DataArgs, config: &ConfigArgs, out: Option<&Path>) -> Result<(), CliError> {
    let config = config.resolve()?;
    let ds = data.load()?;
    let plan = warm_split(&ds, config.test_fraction, config.seed, config.test_negatives)?;
    let report = gradient_check(&ds, &plan, &config, &GradCheckConfig::default())?;
    let mut text = String::from("param\tmax_rel_error\n");
    for (name, err) in report.per_param() {
        writeln!(text, "{name}\t{err:e}").unwrap();
    }
    print!("{text}");
    println!("max_rel_error={:e}", report.max_rel_error());
    println!("passed={}", report.passed());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(dir, "gradcheck.tsv", &text)?;
        let mut manifest = RunManifest::start("gradcheck").with_config(&config);
        for (role, path) in data.paths()? {
            manifest.input(role, path)?;
        }
        manifest.detail("max_rel_error", report.max_rel_error());
        manifest.detail("passed", report.passed());
        manifest.finish(dir, &["gradcheck.tsv"])?;
    }
    if !report.passed() {
        return Err(CliError::Numerical(format!("gradient check failed: max relative error {:e}", report.max_rel_error())));
    }
    Ok(())
}

pub const DATA_FILES: [&str; 3] = ["associations.tsv", "drug_similarity.tsv", "microbe_similarity.tsv"];

fn synth(spec: &SynthSpec, out: &Path) -> Result<(), CliError> {
    let ds = generate(spec).map_err(|e| match e {
        dcfa::Error::Config(m) => CliError::Config(m),
        other => CliError::Core(other),
    })?;
    create_dir(out)?;
    let mut manifest = RunManifest::start("synth");
    manifest.seed = Some(spec.seed);
    manifest.detail("spec", spec);
    ds.write_dir(out)?;
    let path = manifest.finish(out, &DATA_FILES)?;
    println!("wrote {} drugs x {} microbes with {} associations; manifest {}", ds.n_drugs(), ds.n_microbes(), ds.positives().len(), path.display());
    Ok(())
}
