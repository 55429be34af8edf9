//! Presets, JSON configuration files and flag overrides.

use std::path::Path;

use anyhow::Context;
use clap::ValueEnum;
use inferno::inference::SGrid;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale study; hours of CPU time.
    Paper,
    /// Reduced study for a desktop machine; minutes.
    Desk,
    /// Tiny sizes for wiring tests.
    Smoke,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Bin,
}

impl DataFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Bin => "bin",
        }
    }
}

/// Everything a run needs, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub preset: Preset,
    pub seed: u64,
    pub train_size: usize,
    pub valid_size: usize,
    pub eval_size: usize,
    pub format: DataFormat,
    pub epochs: usize,
    pub inferno_learning_rate: f64,
    pub inferno_batch_size: usize,
    pub classifier_learning_rate: f64,
    pub classifier_batch_size: usize,
    /// Number of model seeds in tables.
    pub seeds: u64,
    pub benchmarks: Vec<u8>,
    pub grid: SGrid,
    pub analytic_samples: usize,
    pub scan_r: Vec<f64>,
    pub scan_lambda: Vec<f64>,
}

impl Settings {
    pub fn preset(preset: Preset) -> Self {
        let base = Settings {
            preset,
            seed: 1,
            train_size: 200_000,
            valid_size: 200_000,
            eval_size: 1_000_000,
            format: DataFormat::Csv,
            epochs: 200,
            inferno_learning_rate: 1e-6,
            inferno_batch_size: 2000,
            classifier_learning_rate: 1e-3,
            classifier_batch_size: 64,
            seeds: 10,
            benchmarks: vec![0, 1, 2, 3, 4],
            grid: SGrid::default(),
            analytic_samples: 1_000_000,
            scan_r: vec![-0.4, -0.2, 0.0, 0.2, 0.4],
            scan_lambda: vec![2.0, 2.5, 3.0, 3.5, 4.0],
        };
        match preset {
            Preset::Paper => base,
            Preset::Desk => Settings {
                train_size: 50_000,
                valid_size: 50_000,
                eval_size: 250_000,
                epochs: 30,
                inferno_learning_rate: DESK_INFERNO_LEARNING_RATE,
                seeds: 5,
                ..base
            },
            Preset::Smoke => Settings {
                train_size: 4_000,
                valid_size: 4_000,
                eval_size: 20_000,
                epochs: 2,
                inferno_learning_rate: DESK_INFERNO_LEARNING_RATE,
                inferno_batch_size: 400,
                seeds: 2,
                analytic_samples: 20_000,
                ..base
            },
        }
    }
}

/// The desk preset runs about 27 times fewer optimisation steps than the
/// full study, so the step size is raised tenfold to partly compensate.
pub const DESK_INFERNO_LEARNING_RATE: f64 = 1e-5;

/// Optional overrides, as read from a JSON configuration file or flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub train_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub eval_size: Option<usize>,
    pub format: Option<DataFormat>,
    pub epochs: Option<usize>,
    pub inferno_learning_rate: Option<f64>,
    pub inferno_batch_size: Option<usize>,
    pub classifier_learning_rate: Option<f64>,
    pub classifier_batch_size: Option<usize>,
    pub seeds: Option<u64>,
    pub benchmarks: Option<Vec<u8>>,
    pub grid: Option<SGrid>,
    pub analytic_samples: Option<usize>,
    pub scan_r: Option<Vec<f64>>,
    pub scan_lambda: Option<Vec<f64>>,
}

impl Overrides {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `other` wins wherever it is set.
    pub fn merge(self, other: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            preset,
            seed,
            train_size,
            valid_size,
            eval_size,
            format,
            epochs,
            inferno_learning_rate,
            inferno_batch_size,
            classifier_learning_rate,
            classifier_batch_size,
            seeds,
            benchmarks,
            grid,
            analytic_samples,
            scan_r,
            scan_lambda
        )
    }

    pub fn resolve(self) -> Settings {
        let base = Settings::preset(self.preset.unwrap_or(Preset::Desk));
        macro_rules! apply {
            ($($f:ident),*) => { Settings { $($f: self.$f.unwrap_or(base.$f)),*, preset: base.preset } };
        }
        apply!(
            seed,
            train_size,
            valid_size,
            eval_size,
            format,
            epochs,
            inferno_learning_rate,
            inferno_batch_size,
            classifier_learning_rate,
            classifier_batch_size,
            seeds,
            benchmarks,
            grid,
            analytic_samples,
            scan_r,
            scan_lambda
        )
    }
}

/// Parse `lo:hi:step`.
pub fn parse_grid(s: &str) -> Result<SGrid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("expected lo:hi:step, got {s:?}"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let grid = SGrid { lo: num(lo)?, hi: num(hi)?, step: num(step)? };
    if !(grid.step > 0.0 && grid.hi > grid.lo && grid.lo >= 0.0) {
        return Err(format!("invalid grid {s:?}"));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pin_sizes() {
        let d = Settings::preset(Preset::Desk);
        assert_eq!((d.train_size, d.valid_size, d.eval_size, d.epochs, d.seeds), (50_000, 50_000, 250_000, 30, 5));
        let p = Settings::preset(Preset::Paper);
        assert_eq!((p.train_size, p.valid_size, p.eval_size, p.epochs), (200_000, 200_000, 1_000_000, 200));
        assert_eq!(p.inferno_learning_rate, 1e-6);
    }

    #[test]
    fn flags_win_over_file() {
        let file: Overrides = serde_json::from_str(r#"{"preset":"paper","seed":4,"epochs":7}"#).unwrap();
        let flags = Overrides { seed: Some(9), ..Default::default() };
        let s = file.merge(flags).resolve();
        assert_eq!((s.preset, s.seed, s.epochs, s.train_size), (Preset::Paper, 9, 7, 200_000));
        assert!(serde_json::from_str::<Overrides>(r#"{"sead":1}"#).is_err());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("10:90:0.5").unwrap(), SGrid::default());
        assert!(parse_grid("10:90").is_err());
        assert!(parse_grid("90:10:1").is_err());
    }
}
