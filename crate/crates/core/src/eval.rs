//! Hard (non-differentiable) metrics on predicted label grids, the
//! constraint-satisfaction report, and report serialization.
//!
//! Everything here works on argmax masks, in contrast to the soft
//! groundings in [`crate::constraints`] that drive training. `Connected`
//! and `SimVol` are reported as per-sample grounding means; `Nested` is a
//! violation rate (fraction of samples flagged in either containment
//! direction), which matches the magnitudes real annotations produce.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{
    connectedness_hard, nested_hard, volume_similarity_hard, ConstraintParams, HardMask,
};
use crate::data::LabeledVolume;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Real;

/// Overlap of one class between two label grids: 2|A∩B| / (|A|+|B|).
/// Both masks empty counts as a perfect score: correctly predicting the
/// absence of a structure should not be penalized.
pub fn dice_per_class(pred_labels: &[u8], true_labels: &[u8], class_id: u8) -> f64 {
    debug_assert_eq!(pred_labels.len(), true_labels.len());
    let mut pred = 0usize;
    let mut truth = 0usize;
    let mut overlap = 0usize;
    for (&p, &t) in pred_labels.iter().zip(true_labels) {
        let (ip, it) = (p == class_id, t == class_id);
        pred += ip as usize;
        truth += it as usize;
        overlap += (ip && it) as usize;
    }
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / (pred + truth) as f64
    }
}

/// Mean Dice over the foreground classes {1, 2}; background is excluded so
/// the score reflects the structures of interest.
pub fn mean_dice(pred_labels: &[u8], true_labels: &[u8]) -> f64 {
    (dice_per_class(pred_labels, true_labels, 1) + dice_per_class(pred_labels, true_labels, 2))
        / 2.0
}

/// Hard constraint metrics of one label grid against its own geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConstraintMetrics {
    /// Connectedness grounding on the two hard lobes; 0 if either is empty.
    pub connected: f64,
    /// Sampled nesting detector fired in either containment direction.
    pub nested: bool,
    /// Volume-similarity grounding on the two lobe counts.
    pub sim_vol: f64,
}

/// Evaluates the three hard groundings on the lobes of `labels`. The
/// nesting detector's chords are seeded by `seed`, so results are
/// deterministic per sample regardless of dataset order.
pub fn hard_sample_metrics<T: Real>(
    labels: &[u8],
    height: usize,
    width: usize,
    params: &ConstraintParams<T>,
    seed: u64,
) -> Result<SampleConstraintMetrics> {
    let m1 = HardMask::from_labels(labels, height, width, 1)?;
    let m2 = HardMask::from_labels(labels, height, width, 2)?;
    let connected = if m1.count() == 0 || m2.count() == 0 {
        0.0
    } else {
        connectedness_hard(&m1, &m2, params)?
            .to_f64()
            .expect("grounding is a plain float")
    };
    let nested = nested_hard(&m1, &m2, params.nesting_pairs, params.nesting_steps, derive_seed(&[seed, 1]))
        || nested_hard(&m2, &m1, params.nesting_pairs, params.nesting_steps, derive_seed(&[seed, 2]));
    let sim_vol = volume_similarity_hard::<T>(m1.count(), m2.count(), height * width, params)
        .to_f64()
        .expect("grounding is a plain float");
    Ok(SampleConstraintMetrics { connected, nested, sim_vol })
}

/// One table row: mean ± population std of each metric over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub fraction: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub connected_mean: f64,
    pub connected_std: f64,
    pub nested_mean: f64,
    pub nested_std: f64,
    pub simvol_mean: f64,
    pub simvol_std: f64,
}

/// Constraint-satisfaction table: one row per model plus a ground-truth row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub rows: Vec<ReportRow>,
}

/// A model's predictions over a dataset, aligned by sample position.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub name: String,
    pub fraction: f64,
    pub predictions: Vec<Vec<u8>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The per-sample nesting seed: a pure function of the params seed and the
/// sample id, so reports do not depend on dataset ordering.
fn sample_seed<T: Real>(params: &ConstraintParams<T>, id: u64) -> u64 {
    derive_seed(&[params.seed, id, 0x6576_616c])
}

fn metrics_row<T: Real>(
    name: &str,
    fraction: f64,
    grids: &[(&LabeledVolume, &[u8])],
    params: &ConstraintParams<T>,
) -> Result<ReportRow> {
    let mut dice = Vec::with_capacity(grids.len());
    let mut connected = Vec::with_capacity(grids.len());
    let mut nested = Vec::with_capacity(grids.len());
    let mut sim_vol = Vec::with_capacity(grids.len());
    for (sample, pred) in grids {
        dice.push(mean_dice(pred, &sample.labels));
        let m = hard_sample_metrics(pred, sample.height, sample.width, params, sample_seed(params, sample.id))?;
        connected.push(m.connected);
        nested.push(m.nested as u8 as f64);
        sim_vol.push(m.sim_vol);
    }
    let (dice_mean, dice_std) = mean_std(&dice);
    let (connected_mean, connected_std) = mean_std(&connected);
    let (nested_mean, nested_std) = mean_std(&nested);
    let (simvol_mean, simvol_std) = mean_std(&sim_vol);
    Ok(ReportRow {
        model: name.to_string(),
        fraction,
        dice_mean,
        dice_std,
        connected_mean,
        connected_std,
        nested_mean,
        nested_std,
        simvol_mean,
        simvol_std,
    })
}

/// Builds the constraint-satisfaction table for a set of models over one
/// dataset, appending the ground-truth row. Samples are aggregated in
/// ascending-id order, so the result is invariant to dataset ordering.
pub fn constraint_report<T: Real>(
    models: &[ModelEval],
    dataset: &[LabeledVolume],
    params: &ConstraintParams<T>,
) -> Result<ConstraintReport> {
    if dataset.is_empty() {
        return Err(Error::Contract("constraint report over an empty dataset".into()));
    }
    for m in models {
        if m.predictions.len() != dataset.len() {
            return Err(Error::Contract(format!(
                "model {}: {} predictions for {} samples",
                m.name,
                m.predictions.len(),
                dataset.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset[i].id);

    let mut rows = Vec::with_capacity(models.len() + 1);
    for m in models {
        let grids: Vec<(&LabeledVolume, &[u8])> =
            order.iter().map(|&i| (&dataset[i], m.predictions[i].as_slice())).collect();
        rows.push(metrics_row(&m.name, m.fraction, &grids, params)?);
    }
    let gt: Vec<(&LabeledVolume, &[u8])> =
        order.iter().map(|&i| (&dataset[i], dataset[i].labels.as_slice())).collect();
    rows.push(metrics_row("ground_truth", 1.0, &gt, params)?);
    Ok(ConstraintReport { rows })
}

/// Output encodings for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    TextTable,
}

const CSV_HEADER: &str = "model,fraction,dice_mean,dice_std,connected_mean,connected_std,nested_mean,nested_std,simvol_mean,simvol_std";

fn render_csv(report: &ConstraintReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        // `{}` prints the shortest representation that round-trips exactly.
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.fraction,
            r.dice_mean,
            r.dice_std,
            r.connected_mean,
            r.connected_std,
            r.nested_mean,
            r.nested_std,
            r.simvol_mean,
            r.simvol_std
        )
        .expect("writing to String cannot fail");
    }
    out
}

fn render_text_table(report: &ConstraintReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<16} {:>8} {:>16} {:>16} {:>16} {:>16}",
        "model", "fraction", "dice", "connected", "nested", "simvol"
    )
    .expect("writing to String cannot fail");
    for r in &report.rows {
        let cell = |m: f64, s: f64| format!("{m:.4} ± {s:.4}");
        writeln!(
            out,
            "{:<16} {:>8.2} {:>16} {:>16} {:>16} {:>16}",
            r.model,
            r.fraction,
            cell(r.dice_mean, r.dice_std),
            cell(r.connected_mean, r.connected_std),
            cell(r.nested_mean, r.nested_std),
            cell(r.simvol_mean, r.simvol_std)
        )
        .expect("writing to String cannot fail");
    }
    out
}

/// Renders a report to a string in the requested format.
pub fn render_report(report: &ConstraintReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Contract(e.to_string()))?
        }
        ReportFormat::TextTable => render_text_table(report),
    })
}

/// Writes a report to disk; see [`ReportFormat`] for encodings. CSV and
/// JSON use the fixed column order of [`ReportRow`].
pub fn emit_report(report: &ConstraintReport, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

/// Parses a CSV report written by [`emit_report`]; used by tests and the
/// report subcommand to merge per-run tables.
pub fn parse_csv_report(text: &str) -> Result<ConstraintReport> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::Parse { offset: 0, msg: format!("unexpected report header: {header}") });
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(Error::Parse {
                offset: (lineno + 1) as u64,
                msg: format!("expected 10 columns, got {}", parts.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            parts[i].parse::<f64>().map_err(|e| Error::Parse {
                offset: (lineno + 1) as u64,
                msg: format!("column {i}: {e}"),
            })
        };
        rows.push(ReportRow {
            model: parts[0].to_string(),
            fraction: num(1)?,
            dice_mean: num(2)?,
            dice_std: num(3)?,
            connected_mean: num(4)?,
            connected_std: num(5)?,
            nested_mean: num(6)?,
            nested_std: num(7)?,
            simvol_mean: num(8)?,
            simvol_std: num(9)?,
        });
    }
    Ok(ConstraintReport { rows })
}

/// Dumps a label grid as an 8-bit binary portable graymap for quick visual
/// inspection (class 0/1/2 mapped to black/gray/white).
pub fn write_mask_pgm(labels: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Contract(format!(
            "mask has {} entries, expected {height}x{width}",
            labels.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(labels.iter().map(|&l| [0u8, 128, 255][l.min(2) as usize]));
    std::fs::write(path, buf)?;
    Ok(())
}

/// Dumps an image channel (values in [0,1]) as an 8-bit portable graymap.
pub fn write_image_pgm(image: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if image.len() != height * width {
        return Err(Error::Contract(format!(
            "image has {} entries, expected {height}x{width}",
            image.len()
        )));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, buf)?;
    Ok(())
}
