//! Command implementations. Each writes its outputs and a manifest and
//! returns the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use anyhow::Context;
use inferno::exec::Execution;
use inferno::inference::{
    benchmark_table, evaluate as evaluate_statistic, robustness_scan, write_scan_csv, BenchmarkTable, BinnedObjective,
    EvalSample, ScanPoint, Statistic,
};
use inferno::nn::{ModelFile, ModelKind};
use inferno::oracle::analytic_expected_uncertainty;
use inferno::rng::derive_seed;
use inferno::statmodel::{BenchmarkSpec, Param, ThetaPoint};
use inferno::synthgen::{io, GeneratorConfig, LabeledDataset};
use inferno::train::{train_classifier_with, train_inferno_with, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use crate::check::{self, CheckOutcome};
use crate::config::Settings;
use crate::manifest::RunManifest;
use crate::{parse_args, CliError, Command, LossArg, ScanParam, Suite};

static QUIET: AtomicBool = AtomicBool::new(false);

pub(crate) fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

fn quiet() -> bool {
    QUIET.load(Ordering::Relaxed)
}

/// Progress on stderr.
macro_rules! note {
    ($($t:tt)*) => { if !quiet() { eprintln!($($t)*) } };
}

/// Results on stdout.
macro_rules! say {
    ($($t:tt)*) => { if !quiet() { println!($($t)*) } };
}

pub(crate) fn dispatch(command: Command, args: Vec<String>) -> Result<RunManifest, CliError> {
    match command {
        Command::Generate { settings, out } => generate(&settings.resolve()?, &out, args),
        Command::Train { settings, data, loss, benchmark, out } => {
            train(&settings.resolve()?, &data, loss, benchmark, &out, args)
        }
        Command::Evaluate { settings, data, benchmark, model, optimal: _, out } => {
            let mut settings = settings.resolve()?;
            if let Some(b) = benchmark {
                settings.benchmarks = vec![b];
            }
            evaluate(&settings, &data, model.as_deref(), &out, args)
        }
        Command::Table { settings, data, models, inferno, out } => {
            let settings = settings.resolve()?;
            let data = data.unwrap_or_else(|| out.join("data"));
            let models = models.unwrap_or_else(|| out.join("models"));
            let inferno = inferno.unwrap_or_else(|| settings.benchmarks.clone());
            table(&settings, &data, &models, &inferno, &out, args)
        }
        Command::Scan { settings, data, model, benchmark, param, values, out } => {
            scan(&settings.resolve()?, &data, &model, benchmark, param, values, &out, args)
        }
        Command::Check { suite, cases, points, seed, out } => run_checks(suite, cases, points, seed, &out, args),
        Command::Rerun { manifest } => rerun(&manifest),
    }
}

fn start_manifest(command: &str, args: Vec<String>, settings: Option<&Settings>) -> Result<RunManifest, CliError> {
    let mut m = RunManifest::new(command, args);
    if let Some(s) = settings {
        m.settings = serde_json::to_value(s)?;
        m.seeds.push(s.seed);
    }
    Ok(m)
}

fn finish(mut manifest: RunManifest, path: &Path, start: Instant) -> Result<RunManifest, CliError> {
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.save(path)?;
    Ok(manifest)
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{what} {}", path.display())))
    }
}

/// `dir/name.csv` or `dir/name.bin`, whichever exists.
pub fn data_file(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    ["csv", "bin"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::MissingInput(format!("{name} set in {}", dir.display())))
}

fn load_set(dir: &Path, name: &str, manifest: &mut RunManifest) -> Result<LabeledDataset, CliError> {
    let path = data_file(dir, name)?;
    let data = io::load(&path).with_context(|| format!("reading {}", path.display()))?;
    manifest.input(&path, name)?;
    Ok(data)
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<ModelFile, CliError> {
    require(path, "model")?;
    let model = ModelFile::load(path).with_context(|| format!("reading model {}", path.display()))?;
    manifest.input(path, "model")?;
    Ok(model)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn generate(settings: &Settings, out: &Path, args: Vec<String>) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("generate", args, Some(settings))?;
    write_sets(settings, out, &mut manifest)?;
    finish(manifest, &out.join("manifest.json"), start)
}

fn write_sets(settings: &Settings, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, size) in [("train", settings.train_size), ("valid", settings.valid_size), ("eval", settings.eval_size)] {
        let config = GeneratorConfig {
            signal_count: size / 2,
            background_count: size - size / 2,
            seed: derive_seed(settings.seed, name),
            ..Default::default()
        };
        let data = config.generate()?;
        let path = out.join(format!("{name}.{}", settings.format.extension()));
        io::save(&data, &path).with_context(|| format!("writing {}", path.display()))?;
        manifest.output_rows(&path, name, data.len())?;
        note!("wrote {} ({} rows)", path.display(), data.len());
    }
    Ok(())
}

/// File stem of a trained model.
pub fn model_name(loss: LossArg, benchmark: u8, seed: u64) -> String {
    match loss {
        LossArg::Inferno => format!("inferno-{benchmark}-seed{seed}"),
        LossArg::Classifier => format!("classifier-seed{seed}"),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } | TrainError::NonFiniteGradient => CliError::Diverged(e.to_string()),
        other => CliError::Other(other.into()),
    }
}

/// Train one network; writes `NAME.json` and `NAME.trace.csv` into `out`.
#[allow(clippy::too_many_arguments)]
fn train_model(
    settings: &Settings,
    loss: LossArg,
    benchmark: u8,
    seed: u64,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = model_name(loss, benchmark, seed);
    let epochs = settings.epochs;
    let progress = |rec: &inferno::train::EpochRecord| {
        note!("{name}: epoch {}/{epochs} validation {:.4}", rec.epoch, rec.validation);
    };
    let exec = Execution::default();
    let (config, kind, bench, (params, trace)) = match loss {
        LossArg::Inferno => {
            let spec = BenchmarkSpec::new(benchmark)?;
            let config = TrainConfig {
                learning_rate: settings.inferno_learning_rate,
                batch_size: settings.inferno_batch_size,
                epochs,
                ..TrainConfig::inferno(benchmark, seed)
            };
            let result = train_inferno_with(&config, &spec, train, valid, exec, progress).map_err(train_error)?;
            (config, ModelKind::Inferno, Some(benchmark), result)
        }
        LossArg::Classifier => {
            let config = TrainConfig {
                learning_rate: settings.classifier_learning_rate,
                batch_size: settings.classifier_batch_size,
                epochs,
                ..TrainConfig::classifier(seed)
            };
            let result = train_classifier_with(&config, train, valid, exec, progress).map_err(train_error)?;
            (config, ModelKind::Classifier, None, result)
        }
    };
    let model = ModelFile::new(kind, &params, seed, bench, serde_json::to_value(&config)?);
    let model_path = out.join(format!("{name}.json"));
    model.save(&model_path).with_context(|| format!("writing {}", model_path.display()))?;
    let trace_path = out.join(format!("{name}.trace.csv"));
    let file = fs::File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?;
    trace.write_csv(file)?;
    manifest.output(&model_path, "model")?;
    manifest.output(&trace_path, "trace")?;
    let ridged = trace.steps.iter().filter(|s| s.ridged).count();
    if ridged > 0 {
        manifest.warnings.push(format!("{name}: {ridged} steps needed the Fisher ridge"));
    }
    note!("{name}: trained in {:.1} s", trace.wall_clock_seconds);
    Ok(model_path)
}

fn train(
    settings: &Settings,
    data: &Path,
    loss: LossArg,
    benchmark: u8,
    out: &Path,
    args: Vec<String>,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("train", args, Some(settings))?;
    require(data, "data directory")?;
    let train = load_set(data, "train", &mut manifest)?;
    let valid = load_set(data, "valid", &mut manifest)?;
    train_model(settings, loss, benchmark, settings.seed, &train, &valid, out, &mut manifest)?;
    let name = model_name(loss, benchmark, settings.seed);
    finish(manifest, &out.join(format!("{name}.manifest.json")), start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub statistic: String,
    pub descriptor: String,
    pub benchmark: u8,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub s_min: f64,
    pub fisher_width: f64,
    pub failed_points: usize,
}

fn evaluate(
    settings: &Settings,
    data: &Path,
    model: Option<&Path>,
    out: &Path,
    args: Vec<String>,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("evaluate", args, Some(settings))?;
    require(data, "data directory")?;
    let (label, stat) = match model {
        Some(path) => (stem(path), Statistic::from_model(&load_model(path, &mut manifest)?)?),
        None => ("optimal".to_string(), Statistic::optimal()),
    };
    let eval = EvalSample::from_dataset(&load_set(data, "eval", &mut manifest)?);
    let obj = BinnedObjective::new(&stat, &eval, ThetaPoint::NOMINAL, Execution::default())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut reports = Vec::new();
    for &b in &settings.benchmarks {
        let spec = BenchmarkSpec::new(b)?;
        let ev = evaluate_statistic(&obj, &spec, &stat.descriptor(), settings.grid)?;
        let curve_path = out.join(format!("profile-{label}-b{b}.csv"));
        ev.curve.write_csv(fs::File::create(&curve_path).with_context(|| format!("writing {}", curve_path.display()))?)?;
        manifest.output(&curve_path, "profile")?;
        if ev.failed_points > 0 {
            manifest.warnings.push(format!("benchmark {b}: {} grid points did not converge", ev.failed_points));
        }
        say!(
            "{label} B{b}: width {:.3} [{:.3}, {:.3}] Fisher {:.3}",
            ev.interval.width, ev.interval.lower, ev.interval.upper, ev.fisher_width
        );
        reports.push(IntervalReport {
            statistic: label.clone(),
            descriptor: ev.descriptor,
            benchmark: b,
            lower: ev.interval.lower,
            upper: ev.interval.upper,
            width: ev.interval.width,
            s_min: ev.interval.s_min,
            fisher_width: ev.fisher_width,
            failed_points: ev.failed_points,
        });
    }
    let report_path = out.join(format!("intervals-{label}.json"));
    fs::write(&report_path, serde_json::to_string_pretty(&reports)? + "\n")?;
    manifest.output(&report_path, "intervals")?;
    finish(manifest, &out.join(format!("intervals-{label}.manifest.json")), start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: BenchmarkTable,
    /// Model files behind each row, in seed order.
    pub models: Vec<(String, Vec<PathBuf>)>,
    pub settings: Settings,
}

fn table(
    settings: &Settings,
    data: &Path,
    models_dir: &Path,
    inferno: &[u8],
    out: &Path,
    args: Vec<String>,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("table", args, Some(settings))?;
    if data_file(data, "train").is_err() || data_file(data, "valid").is_err() || data_file(data, "eval").is_err() {
        write_sets(settings, data, &mut manifest)?;
    }
    let mut row_specs = vec![("classifier".to_string(), LossArg::Classifier, 0u8)];
    row_specs.extend(inferno.iter().map(|&b| (format!("inferno-{b}"), LossArg::Inferno, b)));
    let mut sets: Option<(LabeledDataset, LabeledDataset)> = None;
    let mut entries = Vec::new();
    let mut model_paths = Vec::new();
    for (label, loss, b) in &row_specs {
        let mut stats = Vec::new();
        let mut paths = Vec::new();
        for seed in 1..=settings.seeds {
            let path = models_dir.join(format!("{}.json", model_name(*loss, *b, seed)));
            if !path.exists() {
                if sets.is_none() {
                    sets = Some((load_set(data, "train", &mut manifest)?, load_set(data, "valid", &mut manifest)?));
                }
                let (train, valid) = sets.as_ref().expect("loaded above");
                train_model(settings, *loss, *b, seed, train, valid, models_dir, &mut manifest)?;
            }
            stats.push(Statistic::from_model(&load_model(&path, &mut manifest)?)?);
            paths.push(path);
        }
        entries.push((label.clone(), stats));
        model_paths.push((label.clone(), paths));
    }
    drop(sets);
    entries.push(("optimal".to_string(), vec![Statistic::optimal()]));
    let eval = EvalSample::from_dataset(&load_set(data, "eval", &mut manifest)?);
    note!("profiling {} statistics under {} benchmarks", entries.iter().map(|e| e.1.len()).sum::<usize>(), settings.benchmarks.len());
    let mut table = benchmark_table(&entries, &settings.benchmarks, &eval, settings.grid, Execution::default())?;
    drop(eval);
    let analytic = settings
        .benchmarks
        .iter()
        .map(|&b| {
            let spec = BenchmarkSpec::new(b)?;
            Ok(analytic_expected_uncertainty(&spec, &ThetaPoint::NOMINAL, settings.analytic_samples, derive_seed(settings.seed, "analytic"))?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    table.push_analytic("analytic", &analytic);
    if table.failed_points > 0 {
        manifest.warnings.push(format!("{} profile grid points did not converge", table.failed_points));
    }
    print_table(&table);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let csv_path = out.join("table.csv");
    table.write_csv(fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?)?;
    manifest.output(&csv_path, "table")?;
    let report = TableReport { table, models: model_paths, settings: settings.clone() };
    let json_path = out.join("table.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")?;
    manifest.output(&json_path, "table-json")?;
    manifest.seeds.extend(1..=settings.seeds);
    finish(manifest, &out.join("table.manifest.json"), start)
}

fn print_table(table: &BenchmarkTable) {
    let mut header = format!("{:<12}", "statistic");
    for b in &table.benchmarks {
        header.push_str(&format!(" {:>20}", format!("B{b}")));
    }
    if quiet() {
        return;
    }
    println!("{header}");
    for row in &table.rows {
        let mut line = format!("{:<12}", row.label);
        for c in &row.cells {
            let cell = match c.standard_error {
                Some(se) => format!("{:.2} ± {:.2}", c.median, se),
                None => format!("{:.2} +{:.2} -{:.2}", c.median, c.p84 - c.median, c.median - c.p16),
            };
            line.push_str(&format!(" {cell:>20}"));
        }
        println!("{line}");
    }
}

#[allow(clippy::too_many_arguments)]
fn scan(
    settings: &Settings,
    data: &Path,
    models: &[PathBuf],
    benchmark: u8,
    param: ScanParam,
    values: Option<Vec<f64>>,
    out: &Path,
    args: Vec<String>,
) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("scan", args, Some(settings))?;
    require(data, "data directory")?;
    let spec = BenchmarkSpec::new(benchmark)?;
    let mut stats = Vec::new();
    for path in models {
        stats.push((stem(path), Statistic::from_model(&load_model(path, &mut manifest)?)?));
    }
    let eval = EvalSample::from_dataset(&load_set(data, "eval", &mut manifest)?);
    let params: Vec<(Param, Vec<f64>)> = match param {
        ScanParam::R => vec![(Param::R, values.unwrap_or_else(|| settings.scan_r.clone()))],
        ScanParam::Lambda => vec![(Param::Lambda, values.unwrap_or_else(|| settings.scan_lambda.clone()))],
        ScanParam::Both => vec![(Param::R, settings.scan_r.clone()), (Param::Lambda, settings.scan_lambda.clone())],
    };
    let mut rows: Vec<(String, Vec<ScanPoint>)> = Vec::new();
    for (label, stat) in &stats {
        let obj = BinnedObjective::new(stat, &eval, ThetaPoint::NOMINAL, Execution::default())?;
        let mut points = Vec::new();
        for (p, vals) in &params {
            for point in robustness_scan(&obj, &spec, *p, vals, settings.grid)? {
                say!("{label} {}={}: width {:.3}", point.parameter, point.value, point.width);
                points.push(point);
            }
        }
        rows.push((label.clone(), points));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("scan.csv");
    write_scan_csv(&rows, fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?)?;
    manifest.output(&path, "scan")?;
    finish(manifest, &out.join("scan.manifest.json"), start)
}

/// Networks checked for Asimov stationarity.
const STATIONARITY_NETWORKS: usize = 10;

fn run_checks(suite: Suite, cases: usize, points: usize, seed: u64, out: &Path, args: Vec<String>) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let mut manifest = start_manifest("check", args, None)?;
    manifest.seeds.push(seed);
    let want = |s: Suite| suite == Suite::All || suite == s;
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    if want(Suite::Gradients) {
        outcomes.extend(check::gradient_suite(cases, seed));
    }
    if want(Suite::Stationarity) {
        outcomes.push(check::stationarity_suite(STATIONARITY_NETWORKS, seed));
    }
    if want(Suite::Softhard) {
        outcomes.extend(check::soft_hard_suite(seed));
    }
    if want(Suite::Fisher) {
        outcomes.extend(check::fisher_fixture_suite());
    }
    if want(Suite::Sufficiency) {
        outcomes.extend(check::sufficiency_suite(points, seed));
    }
    for o in &outcomes {
        say!("{o}");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = out.join("check-report.json");
    fs::write(&report, serde_json::to_string_pretty(&outcomes)? + "\n")?;
    manifest.output(&report, "report")?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    let manifest = finish(manifest, &out.join("check.manifest.json"), start)?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn rerun(path: &Path) -> Result<RunManifest, CliError> {
    require(path, "manifest")?;
    let recorded = RunManifest::load(path)?;
    if recorded.command == "rerun" {
        return Err(CliError::Other(anyhow::anyhow!("{} records a rerun", path.display())));
    }
    note!("rerunning: inferno {}", recorded.args.join(" "));
    // dispatched directly so the caller's thread and output settings stay
    let fresh = dispatch(parse_args(&recorded.args)?.command, recorded.args.clone())?;
    let mismatches = recorded.mismatches(&fresh);
    if mismatches.is_empty() {
        say!("reproduced {} outputs", recorded.outputs.len());
        Ok(fresh)
    } else {
        for m in &mismatches {
            say!("mismatch {m}");
        }
        Err(CliError::Verification(format!("{} of {} outputs differ", mismatches.len(), recorded.outputs.len())))
    }
}
