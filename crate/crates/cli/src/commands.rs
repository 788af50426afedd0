//! Subcommand implementations. Each one resolves to plain library calls;
//! all provenance (config echoes, fold layout) is handled here.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, Context, Result};
use slseg_core::autodiff::{no_grad, standard_suite};
use slseg_core::constraints::{grounding_suite, ConstraintParams};
use slseg_core::data::{generate_dataset, kfold_split, read_dataset, write_dataset};
use slseg_core::eval::{
    constraint_report, emit_report, parse_csv_report, render_report, ModelEval, ReportFormat,
    ReportRow,
};
use slseg_core::model::SegModel;
use slseg_core::train::{fit_fold, EpochRecord};

use crate::config::RunConfig;

/// Generates `n` phantoms into the dataset file, plus a sibling
/// `<data>.config` echo so the file's provenance travels with it.
pub fn generate(config: &RunConfig) -> Result<()> {
    if config.n == 0 {
        bail!("n must be >= 1");
    }
    let phantom = config.phantom_config();
    phantom.validate()?;
    let samples = generate_dataset(&phantom, config.n)?;
    if let Some(dir) = config.data.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    write_dataset(&samples, &config.data)
        .with_context(|| format!("writing {}", config.data.display()))?;
    let echo = echo_sibling(&config.data);
    fs::write(&echo, config.render()).with_context(|| format!("writing {}", echo.display()))?;
    println!("wrote {} samples to {}", samples.len(), config.data.display());
    Ok(())
}

fn echo_sibling(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_os_string();
    name.push(".config");
    PathBuf::from(name)
}

/// Trains all `k` folds of one (mode, fraction) setting. Each fold directory
/// receives the checkpoint, the per-epoch history, and the config echo.
pub fn train(config: &RunConfig) -> Result<()> {
    let train_config = config.train_config();
    train_config.validate()?;
    let dataset = read_dataset(&config.data)
        .with_context(|| format!("dataset {}", config.data.display()))?;
    let plan = kfold_split(dataset.len(), config.k, config.split_seed())?;
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let echo = config.render();
    fs::write(run_dir.join("config.txt"), &echo)?;

    let model_config = config.model_config();
    // Tensors are not Send, so a fold's model never leaves its thread: the
    // checkpoint is written by fit_fold and only plain records cross back.
    let run_fold = |fold: usize| -> Result<(usize, Vec<EpochRecord>)> {
        let result = fit_fold(
            &dataset,
            &plan,
            fold,
            config.fraction,
            &model_config,
            &train_config,
            Some(run_dir.as_path()),
        )
        .with_context(|| format!("fold {fold}"))?;
        Ok((result.fold, result.history))
    };
    let folds: Vec<(usize, Vec<EpochRecord>)> = if config.parallel {
        let run_fold = &run_fold;
        thread::scope(|scope| {
            let handles: Vec<_> =
                (0..config.k).map(|fold| scope.spawn(move || run_fold(fold))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..config.k).map(run_fold).collect::<Result<Vec<_>>>()?
    };

    let mut dice_sum = 0.0;
    for (fold, history) in &folds {
        fs::write(run_dir.join(format!("fold_{fold}")).join("config.txt"), &echo)?;
        let last = history.last().expect("training ran at least one epoch");
        println!("fold {fold}: val dice {:.4} after {} epochs", last.val_dice, history.len());
        dice_sum += last.val_dice;
    }
    println!(
        "mean val dice {:.4} ({}, fraction {}) -> {}",
        dice_sum / folds.len() as f64,
        config.mode,
        config.fraction,
        run_dir.display()
    );
    Ok(())
}

/// Rebuilds the fold-to-validation mapping from a run's config echo, scores
/// every held-out sample with its fold's checkpoint, and writes the
/// constraint-satisfaction report (CSV and text) into the run directory.
pub fn evaluate(run_dir: &Path, data_override: Option<&Path>) -> Result<()> {
    let echo_path = run_dir.join("config.txt");
    let echo = fs::read_to_string(&echo_path)
        .with_context(|| format!("run config {}", echo_path.display()))?;
    let mut config = RunConfig::default();
    config
        .apply_str(&echo)
        .with_context(|| format!("run config {}", echo_path.display()))?;
    if let Some(data) = data_override {
        config.data = data.to_path_buf();
    }

    let dataset = read_dataset(&config.data)
        .with_context(|| format!("dataset {}", config.data.display()))?;
    let plan = kfold_split(dataset.len(), config.k, config.split_seed())?;
    let mut predictions: Vec<Vec<u8>> = vec![Vec::new(); dataset.len()];
    no_grad(|| -> Result<()> {
        for fold in 0..config.k {
            let path = run_dir.join(format!("fold_{fold}")).join("model.ckpt");
            let model = SegModel::<f64>::load(&path)
                .with_context(|| format!("checkpoint {}", path.display()))?;
            for i in plan.val_indices(fold) {
                predictions[i] = model.predict_mask(&dataset[i].image_tensor())?;
            }
        }
        Ok(())
    })?;

    let eval =
        ModelEval { name: config.mode.to_string(), fraction: config.fraction, predictions };
    // The report detector always runs with canonical parameters, so rows
    // stay comparable across differently tuned training runs.
    let report = constraint_report(&[eval], &dataset, &ConstraintParams::<f64>::default())?;
    emit_report(&report, &run_dir.join("report.csv"), ReportFormat::Csv)?;
    let text = render_report(&report, ReportFormat::TextTable)?;
    fs::write(run_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Runs every finite-difference suite and prints one row per check.
/// Returns false when any check exceeds `tol`.
pub fn gradcheck(rounds: usize, tol: f64, seed: u64) -> Result<bool> {
    if rounds == 0 {
        bail!("rounds must be >= 1");
    }
    if !(tol > 0.0) {
        bail!("tol must be > 0");
    }
    let mut cases = standard_suite::<f64>(rounds, seed)?;
    cases.extend(grounding_suite::<f64>(rounds, seed)?);
    println!("{:<22} {:>7} {:>6} {:>13}  result", "check", "coords", "kinks", "max rel err");
    let mut failures = 0usize;
    for case in &cases {
        let ok = case.max_rel_err <= tol;
        failures += usize::from(!ok);
        println!(
            "{:<22} {:>7} {:>6} {:>13.3e}  {}",
            case.name,
            case.checked,
            case.skipped_kinks,
            case.max_rel_err,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, {failures} failures (tol {tol:e}, {rounds} rounds, seed {seed})",
        cases.len()
    );
    Ok(failures == 0)
}

/// Collects `report.csv` files under `root` (a single run directory or the
/// output root) and prints dice and constraint summary tables.
pub fn report(root: &Path, out: Option<&Path>) -> Result<()> {
    let csvs = find_reports(root)?;
    if csvs.is_empty() {
        bail!("no report.csv under {}; run `slseg evaluate` on each run first", root.display());
    }
    let mut model_rows: Vec<ReportRow> = Vec::new();
    let mut ground_truth: Option<ReportRow> = None;
    for path in &csvs {
        let text = fs::read_to_string(path)?;
        let parsed =
            parse_csv_report(&text).with_context(|| format!("report {}", path.display()))?;
        for row in parsed.rows {
            if row.model == "ground_truth" {
                // Identical across runs over the same dataset; keep the first.
                ground_truth.get_or_insert(row);
            } else {
                model_rows.push(row);
            }
        }
    }
    model_rows.sort_by(|a, b| {
        b.fraction.total_cmp(&a.fraction).then_with(|| a.model.cmp(&b.model))
    });

    let text = render_tables(&model_rows, ground_truth.as_ref());
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let direct = root.join("report.csv");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut found = Vec::new();
    for mode_dir in read_dir_sorted(root)? {
        if !mode_dir.is_dir() {
            continue;
        }
        for run_dir in read_dir_sorted(&mode_dir)? {
            let csv = run_dir.join("report.csv");
            if csv.is_file() {
                found.push(csv);
            }
        }
    }
    Ok(found)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn render_tables(model_rows: &[ReportRow], ground_truth: Option<&ReportRow>) -> String {
    let mut text = String::new();
    let cell = |m: f64, s: f64| format!("{m:.4} ± {s:.4}");
    let mut line = |s: &str| writeln!(text, "{s}").expect("writing to String cannot fail");

    line("validation dice (mean ± std over held-out samples)");
    line(&format!("{:<14} {:>8} {:>18}", "model", "fraction", "dice"));
    for r in model_rows {
        line(&format!(
            "{:<14} {:>8} {:>18}",
            r.model,
            r.fraction,
            cell(r.dice_mean, r.dice_std)
        ));
    }
    line("");
    line("constraint satisfaction of hard predictions");
    line(&format!(
        "{:<14} {:>8} {:>18} {:>18} {:>18}",
        "model", "fraction", "connected", "nested", "simvol"
    ));
    for r in model_rows.iter().chain(ground_truth) {
        line(&format!(
            "{:<14} {:>8} {:>18} {:>18} {:>18}",
            r.model,
            r.fraction,
            cell(r.connected_mean, r.connected_std),
            cell(r.nested_mean, r.nested_std),
            cell(r.simvol_mean, r.simvol_std)
        ));
    }
    text
}
