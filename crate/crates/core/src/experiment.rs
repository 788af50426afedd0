//! Reproducible multi-seed experiment: the full baseline-vs-constraints
//! matrix over training fractions, with cross-validated hard metrics.
//!
//! For every (mode, fraction) cell the harness trains k folds for each
//! global seed, scores each held-out sample with the model that never saw
//! it, and aggregates validation Dice plus the hard constraint metrics.
//! Every stage is seeded, so a rerun with the same config reproduces every
//! reported number bit-exactly.

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintParams;
use crate::data::{generate_dataset, kfold_split, LabeledVolume, PhantomConfig};
use crate::error::{Error, Result};
use crate::eval::hard_sample_metrics;
use crate::model::SegModelConfig;
use crate::rng::derive_seed;
use crate::scalar::lit;
use crate::train::{fit, Mode, TrainConfig};

/// Full experiment specification. The defaults are tuned for desk-scale
/// runtime: a narrow model and a learning rate matched to the short
/// 30-epoch schedule.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n_samples: usize,
    pub data_seed: u64,
    pub k: usize,
    /// Global seeds; each gets its own model initializations and shuffles.
    pub seeds: Vec<u64>,
    pub fractions: Vec<f64>,
    pub model: SegModelConfig,
    /// Template for both modes; `seed` and `mode` are overridden per run.
    pub train: TrainConfig<f64>,
    pub phantom: PhantomConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale protocol: a narrow model, a hot short schedule, and
    /// constraint sharpness rescaled for the small grid (the defaults in
    /// [`ConstraintParams`] target the reference volume scale). The dilute
    /// quantifier exponent and the dice-leaning aggregation keep the
    /// constraint gradients from dominating the overlap term on a model
    /// this small, and the knowledge-base loss fades in over the whole
    /// schedule: at the hot end of the cosine the overlap term leads, and
    /// constraint weight peaks only once the learning rate has cooled,
    /// which avoids destabilizing runs that converge early.
    fn default() -> Self {
        let model = SegModelConfig { base_width: 5, depth: 2, ..SegModelConfig::default() };
        let constraints = ConstraintParams {
            gamma_c: lit(1e-4),
            gamma_v: lit(1e-5),
            quantifier_p: lit(1.0),
            ..ConstraintParams::default()
        };
        let train = TrainConfig {
            eta: lit(1e-2),
            epochs: 30,
            agg_p: lit(3.0),
            constraint_ramp_epochs: 30,
            constraints,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            n_samples: 200,
            data_seed: 7,
            k: 5,
            seeds: vec![1, 2, 3],
            fractions: vec![1.0, 0.25, 0.05],
            model,
            train,
            phantom: PhantomConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.fractions.is_empty() {
            return Err(Error::Parameter("need at least one seed and one fraction".into()));
        }
        if self.n_samples < self.k {
            return Err(Error::Parameter(format!(
                "{} samples cannot form {} folds",
                self.n_samples, self.k
            )));
        }
        self.train.validate()?;
        self.phantom.validate()?;
        self.model.validate()
    }
}

/// Aggregated outcome of one (mode, fraction) cell across seeds and folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: String,
    pub fraction: f64,
    /// Mean and population std of final-epoch validation Dice over
    /// seed x fold runs.
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Cross-validated hard metrics over the full dataset, averaged over
    /// seeds.
    pub connected_mean: f64,
    pub nested_rate: f64,
    pub simvol_mean: f64,
}

/// The whole matrix plus the dataset's ground-truth constraint profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<CellSummary>,
    pub ground_truth_connected: f64,
    pub ground_truth_nested: f64,
    pub ground_truth_simvol: f64,
}

impl ExperimentResult {
    pub fn cell(&self, mode: Mode, fraction: f64) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.mode == mode.as_str() && c.fraction == fraction)
    }
}

struct HardAverages {
    connected: f64,
    nested: f64,
    sim_vol: f64,
}

/// Mean hard metrics of a set of predicted grids, aggregated in ascending
/// sample-id order.
fn hard_averages(
    dataset: &[LabeledVolume],
    predictions: &[Option<Vec<u8>>],
    params: &ConstraintParams<f64>,
) -> Result<HardAverages> {
    let mut connected = 0.0;
    let mut nested = 0.0;
    let mut sim_vol = 0.0;
    let mut n = 0usize;
    for (sample, pred) in dataset.iter().zip(predictions) {
        let pred = pred
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} was never validated", sample.id)))?;
        let seed = derive_seed(&[params.seed, sample.id, 0x6576_616c]);
        let m = hard_sample_metrics(pred, sample.height, sample.width, params, seed)?;
        connected += m.connected;
        nested += m.nested as u8 as f64;
        sim_vol += m.sim_vol;
        n += 1;
    }
    let n = n as f64;
    Ok(HardAverages { connected: connected / n, nested: nested / n, sim_vol: sim_vol / n })
}

/// Runs the full matrix. Within a fold, the training subsets of smaller
/// fractions are nested inside the larger ones, so differences between
/// fractions isolate the amount of data.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let phantom = PhantomConfig { seed: config.data_seed, ..config.phantom.clone() };
    let dataset = generate_dataset(&phantom, config.n_samples)?;
    let plan = kfold_split(
        dataset.len(),
        config.k,
        derive_seed(&[config.data_seed, 0x6b66_6f6c_64]),
    )?;

    // Hard metrics use the canonical detector regardless of training-time
    // constraint tuning, so cells stay comparable across configs.
    let metric_params = ConstraintParams::<f64>::default();
    let gt = {
        let truth: Vec<Option<Vec<u8>>> = dataset.iter().map(|s| Some(s.labels.clone())).collect();
        hard_averages(&dataset, &truth, &metric_params)?
    };

    let mut cells = Vec::new();
    for &mode in &[Mode::Baseline, Mode::Ltn] {
        for &fraction in &config.fractions {
            let mut dice_values = Vec::new();
            let mut connected_sum = 0.0;
            let mut nested_sum = 0.0;
            let mut simvol_sum = 0.0;
            for &seed in &config.seeds {
                let train_config = TrainConfig { mode, seed, ..config.train.clone() };
                let folds = fit(&dataset, &plan, fraction, &config.model, &train_config, None)?;
                let mut predictions: Vec<Option<Vec<u8>>> = vec![None; dataset.len()];
                for result in &folds {
                    let record = result.history.last().expect("epochs >= 1");
                    dice_values.push(record.val_dice);
                    for i in plan.val_indices(result.fold) {
                        let sample = &dataset[i];
                        let mask = result.model.predict_mask(&sample.image_tensor())?;
                        predictions[i] = Some(mask);
                    }
                }
                let averages = hard_averages(&dataset, &predictions, &metric_params)?;
                connected_sum += averages.connected;
                nested_sum += averages.nested;
                simvol_sum += averages.sim_vol;
            }
            let n_runs = dice_values.len() as f64;
            let dice_mean = dice_values.iter().sum::<f64>() / n_runs;
            let dice_var =
                dice_values.iter().map(|d| (d - dice_mean) * (d - dice_mean)).sum::<f64>() / n_runs;
            let n_seeds = config.seeds.len() as f64;
            cells.push(CellSummary {
                mode: mode.as_str().to_string(),
                fraction,
                dice_mean,
                dice_std: dice_var.sqrt(),
                connected_mean: connected_sum / n_seeds,
                nested_rate: nested_sum / n_seeds,
                simvol_mean: simvol_sum / n_seeds,
            });
        }
    }

    Ok(ExperimentResult {
        cells,
        ground_truth_connected: gt.connected,
        ground_truth_nested: gt.nested,
        ground_truth_simvol: gt.sim_vol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shrunken matrix: exercises the full pipeline and its determinism.
    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n_samples: 10,
            k: 2,
            seeds: vec![1],
            fractions: vec![1.0, 0.5],
            model: SegModelConfig { base_width: 2, depth: 1, ..SegModelConfig::default() },
            train: TrainConfig { epochs: 2, ..ExperimentConfig::default().train },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn experiment_runs_and_is_bit_deterministic() {
        let config = tiny_config();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.cells.len(), 4);
        assert_eq!(a, b);
        for cell in &a.cells {
            assert!(cell.dice_mean.is_finite() && (0.0..=1.0).contains(&cell.dice_mean));
            assert!(cell.dice_std >= 0.0);
            assert!((0.0..=1.0).contains(&cell.nested_rate));
        }
        assert!(a.ground_truth_connected >= 0.97);
        assert!(a.ground_truth_nested <= 0.08);
        assert_eq!(a.ground_truth_simvol, 1.0);
        assert!(a.cell(Mode::Ltn, 0.5).is_some());
        assert!(a.cell(Mode::Ltn, 0.75).is_none());
    }

    #[test]
    fn config_validation_catches_degenerate_matrices() {
        let ok = tiny_config();
        ok.validate().unwrap();
        assert!(ExperimentConfig { seeds: vec![], ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { fractions: vec![], ..ok.clone() }.validate().is_err());
        assert!(ExperimentConfig { n_samples: 1, ..ok }.validate().is_err());
    }
}
